//! A deterministic two-language toy world with controllable text style.
//!
//! Sentences are realised from an abstract clause (`[marker] NP verb [NP]
//! [adverb]`). Adjective placement is grammatical: after the noun in the
//! source language, before it in the target language. Adverb placement is
//! free, but each language has a preferred side: the source language puts
//! adverbs last, the target language first. Every concept has several
//! synonyms, the first being canonical.
//!
//! * Nature style: adverb on the preferred side with probability
//!   `p_preferred_adverb`, synonyms sampled (canonical is the most likely),
//!   optional sentence-initial discourse marker.
//! * HT-surrogate style (translationese): produced only by translating; it
//!   keeps the adverb on the side it had in the text it was translated from,
//!   uses canonical synonyms only, and drops discourse markers.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MonoCorpus, ParallelCorpus, Provenance, Sentence, SentencePair};
use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub source_language: String,
    pub target_language: String,
    pub nouns: usize,
    pub adjectives: usize,
    pub verbs: usize,
    pub adverbs: usize,
    pub markers: usize,
    /// Surface forms per concept; form 0 is canonical.
    pub synonyms: usize,
    /// Exponent of the Zipf law over concepts within a word class.
    pub zipf_exponent: f64,
    /// Probability that Nature text uses a non-canonical synonym.
    pub p_alternative: f64,
    pub p_marker: f64,
    pub p_adjective: f64,
    pub p_object: f64,
    pub p_adverb: f64,
    /// Probability that Nature text puts the adverb on its language's preferred side.
    pub p_preferred_adverb: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 1,
            source_language: "src".into(),
            target_language: "tgt".into(),
            nouns: 200,
            adjectives: 100,
            verbs: 100,
            adverbs: 60,
            markers: 6,
            synonyms: 2,
            zipf_exponent: 1.1,
            p_alternative: 0.45,
            p_marker: 0.3,
            p_adjective: 0.7,
            p_object: 0.7,
            p_adverb: 0.8,
            p_preferred_adverb: 0.9,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world spec: {m}")));
        if self.nouns < 2 || self.adjectives < 1 || self.verbs < 1 || self.adverbs < 1 || self.markers < 1 {
            return bad("every word class needs at least one concept (two nouns)");
        }
        if self.synonyms < 1 {
            return bad("synonyms must be at least 1");
        }
        for (name, p) in [
            ("p_alternative", self.p_alternative),
            ("p_marker", self.p_marker),
            ("p_adjective", self.p_adjective),
            ("p_object", self.p_object),
            ("p_adverb", self.p_adverb),
            ("p_preferred_adverb", self.p_preferred_adverb),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be a probability"));
            }
        }
        if self.source_language == self.target_language {
            return bad("the two languages need distinct names");
        }
        Ok(())
    }

    /// Surface vocabulary size of one language.
    pub fn words_per_language(&self) -> usize {
        (self.nouns + self.adjectives + self.verbs + self.adverbs) * self.synonyms + DETERMINERS + self.markers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSizes {
    pub bitext: usize,
    pub mono_source: usize,
    pub mono_target: usize,
    /// Pairs in each of the original and reverse test sets.
    pub test: usize,
    pub dev: usize,
}

impl Default for WorldSizes {
    fn default() -> Self {
        WorldSizes { bitext: 20_000, mono_source: 20_000, mono_target: 20_000, test: 500, dev: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Style {
    Nature,
    HtSurrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    /// Whether Nature text of this side prefers the adverb first.
    fn adverb_first(self) -> bool {
        self == Side::Target
    }

    fn other(self) -> Side {
        match self {
            Side::Source => Side::Target,
            Side::Target => Side::Source,
        }
    }
}

const DETERMINERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Class {
    Noun,
    Adj,
    Verb,
    Adv,
    Det,
    Marker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Word {
    class: Class,
    concept: usize,
    form: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Np {
    det: usize,
    noun: usize,
    adj: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Clause {
    marker: Option<usize>,
    subject: Np,
    verb: usize,
    object: Option<Np>,
    adverb: Option<usize>,
    adverb_first: bool,
}

/// Surface forms of both languages.
#[derive(Debug, Clone)]
struct Lexicon {
    forms: HashMap<(Side, Class, usize, usize), String>,
    parse: HashMap<(Side, String), Word>,
}

struct Phonology {
    onsets: &'static [&'static str],
    vowels: &'static [&'static str],
    suffix: fn(Class) -> &'static str,
}

fn source_suffix(c: Class) -> &'static str {
    match c {
        Class::Noun => "or",
        Class::Adj => "is",
        Class::Verb => "at",
        Class::Adv => "umo",
        Class::Det => "",
        Class::Marker => "y",
    }
}

fn target_suffix(c: Class) -> &'static str {
    match c {
        Class::Noun => "en",
        Class::Adj => "ul",
        Class::Verb => "ie",
        Class::Adv => "ax",
        Class::Det => "",
        Class::Marker => "oh",
    }
}

const SOURCE_PHON: Phonology = Phonology {
    onsets: &["p", "t", "k", "b", "d", "g", "m", "n", "l", "r", "s", "v"],
    vowels: &["a", "e", "i", "o", "u"],
    suffix: source_suffix,
};

const TARGET_PHON: Phonology = Phonology {
    onsets: &["f", "h", "j", "w", "z", "sh", "ch", "th", "kr", "pl", "st", "gl"],
    vowels: &["a", "e", "i", "o", "u", "ai", "ou"],
    suffix: target_suffix,
};

fn class_sizes(spec: &WorldSpec) -> [(Class, usize, usize); 6] {
    [
        (Class::Noun, spec.nouns, spec.synonyms),
        (Class::Adj, spec.adjectives, spec.synonyms),
        (Class::Verb, spec.verbs, spec.synonyms),
        (Class::Adv, spec.adverbs, spec.synonyms),
        (Class::Det, DETERMINERS, 1),
        (Class::Marker, spec.markers, 1),
    ]
}

impl Lexicon {
    fn build(spec: &WorldSpec) -> Lexicon {
        let mut forms = HashMap::new();
        let mut parse = HashMap::new();
        for (side, phon, dets) in [
            (Side::Source, &SOURCE_PHON, ["lo", "una"]),
            (Side::Target, &TARGET_PHON, ["ta", "eni"]),
        ] {
            let mut rng = rng_for(spec.seed, 0x1e71 + side as u64);
            let mut used: HashSet<String> = dets.iter().map(|d| d.to_string()).collect();
            for (class, concepts, synonyms) in class_sizes(spec) {
                for c in 0..concepts {
                    for f in 0..synonyms {
                        let word = if class == Class::Det {
                            dets[c].to_string()
                        } else {
                            loop {
                                let syllables = if class == Class::Marker { 1 } else { 2 };
                                let mut w = String::new();
                                for _ in 0..syllables {
                                    w.push_str(phon.onsets[rng.gen_range(0..phon.onsets.len())]);
                                    w.push_str(phon.vowels[rng.gen_range(0..phon.vowels.len())]);
                                }
                                w.push_str((phon.suffix)(class));
                                if used.insert(w.clone()) {
                                    break w;
                                }
                            }
                        };
                        parse.insert((side, word.clone()), Word { class, concept: c, form: f });
                        forms.insert((side, class, c, f), word);
                    }
                }
            }
        }
        Lexicon { forms, parse }
    }

    fn form(&self, side: Side, w: Word) -> &str {
        &self.forms[&(side, w.class, w.concept, w.form)]
    }
}

/// Generator state shared by sampling and oracle translation.
pub struct World {
    pub spec: WorldSpec,
    lexicon: Lexicon,
    zipf: BTreeMap<Class, WeightedIndex<f64>>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<World> {
        spec.validate()?;
        let lexicon = Lexicon::build(&spec);
        let mut zipf = BTreeMap::new();
        for (class, n, _) in class_sizes(&spec) {
            let w: Vec<f64> = (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(spec.zipf_exponent)).collect();
            zipf.insert(class, WeightedIndex::new(w).map_err(|e| Error::Config(e.to_string()))?);
        }
        Ok(World { spec, lexicon, zipf })
    }

    fn language(&self, side: Side) -> &str {
        match side {
            Side::Source => &self.spec.source_language,
            Side::Target => &self.spec.target_language,
        }
    }

    fn concept(&self, class: Class, rng: &mut ChaCha8Rng) -> usize {
        self.zipf[&class].sample(rng)
    }

    fn sample_np(&self, rng: &mut ChaCha8Rng) -> Np {
        Np {
            det: rng.gen_range(0..DETERMINERS),
            noun: self.concept(Class::Noun, rng),
            adj: rng.gen_bool(self.spec.p_adjective).then(|| self.concept(Class::Adj, rng)),
        }
    }

    fn sample_clause(&self, rng: &mut ChaCha8Rng) -> Clause {
        Clause {
            marker: rng.gen_bool(self.spec.p_marker).then(|| self.concept(Class::Marker, rng)),
            subject: self.sample_np(rng),
            verb: self.concept(Class::Verb, rng),
            object: rng.gen_bool(self.spec.p_object).then(|| self.sample_np(rng)),
            adverb: rng.gen_bool(self.spec.p_adverb).then(|| self.concept(Class::Adv, rng)),
            adverb_first: false,
        }
    }

    fn nature_adverb_first(&self, side: Side, rng: &mut ChaCha8Rng) -> bool {
        side.adverb_first() == rng.gen_bool(self.spec.p_preferred_adverb)
    }

    fn pick_form(&self, rng: &mut ChaCha8Rng) -> usize {
        if self.spec.synonyms > 1 && rng.gen_bool(self.spec.p_alternative) {
            rng.gen_range(1..self.spec.synonyms)
        } else {
            0
        }
    }

    /// Grammatical order of `side`; `form` chooses each content word's synonym.
    fn realize(&self, clause: &Clause, side: Side, form: &mut dyn FnMut() -> usize) -> Vec<Word> {
        let mut content = |class, concept| Word { class, concept, form: form() };
        let mut out = Vec::new();
        if let Some(m) = clause.marker {
            out.push(Word { class: Class::Marker, concept: m, form: 0 });
        }
        let adverb = clause.adverb.map(|a| content(Class::Adv, a));
        if clause.adverb_first {
            out.extend(adverb);
        }
        for (i, np) in std::iter::once(&clause.subject).chain(clause.object.as_ref()).enumerate() {
            out.push(Word { class: Class::Det, concept: np.det, form: 0 });
            let noun = content(Class::Noun, np.noun);
            let adj = np.adj.map(|a| content(Class::Adj, a));
            match side {
                Side::Source => out.extend([Some(noun), adj].into_iter().flatten()),
                Side::Target => out.extend([adj, Some(noun)].into_iter().flatten()),
            }
            if i == 0 {
                out.push(content(Class::Verb, clause.verb));
            }
        }
        if !clause.adverb_first {
            out.extend(adverb);
        }
        out
    }

    fn realize_nature(&self, clause: &Clause, side: Side, rng: &mut ChaCha8Rng) -> Vec<Word> {
        let clause = Clause { adverb_first: self.nature_adverb_first(side, rng), ..*clause };
        let rng = std::cell::RefCell::new(rng);
        self.realize(&clause, side, &mut || self.pick_form(&mut rng.borrow_mut()))
    }

    fn surface(&self, side: Side, words: &[Word]) -> Sentence {
        Sentence::new(words.iter().map(|w| self.lexicon.form(side, *w).to_owned()).collect())
    }

    fn parse_words(&self, side: Side, s: &Sentence) -> Result<Vec<Word>> {
        s.iter()
            .map(|t| {
                self.lexicon
                    .parse
                    .get(&(side, t.to_owned()))
                    .copied()
                    .ok_or_else(|| Error::Data(format!("token {t:?} is not a {} word of this world", self.language(side))))
            })
            .collect()
    }

    /// Recovers the clause from any word order this world produces.
    fn parse_clause(words: &[Word]) -> Result<Clause> {
        let err = || Error::Data("sentence does not follow the world grammar".into());
        let mut marker = None;
        let mut adverb = None;
        let mut verb = None;
        let mut adverb_first = false;
        let mut nps: Vec<Np> = Vec::new();
        let mut cur: Option<Np> = None;
        for w in words {
            match w.class {
                Class::Marker => marker = Some(w.concept),
                Class::Adv => {
                    adverb = Some(w.concept);
                    adverb_first = verb.is_none();
                }
                Class::Verb => verb = Some(w.concept),
                Class::Det => {
                    nps.extend(cur.take());
                    cur = Some(Np { det: w.concept, noun: usize::MAX, adj: None });
                }
                Class::Noun => cur.as_mut().ok_or_else(err)?.noun = w.concept,
                Class::Adj => cur.as_mut().ok_or_else(err)?.adj = Some(w.concept),
            }
        }
        nps.extend(cur);
        if nps.is_empty() || nps.len() > 2 || nps.iter().any(|n| n.noun == usize::MAX) {
            return Err(err());
        }
        Ok(Clause {
            marker,
            subject: nps[0],
            verb: verb.ok_or_else(err)?,
            object: nps.get(1).copied(),
            adverb,
            adverb_first,
        })
    }

    /// Translates a sentence of language `from` into the other language.
    ///
    /// HT-surrogate output keeps the adverb where the input had it, maps
    /// every content word to its canonical form, and drops markers. Nature
    /// output re-realises the clause with sampled adverb side, synonyms and
    /// marker, seeded by the sentence text.
    pub fn translate(&self, s: &Sentence, from: Side, style: Style) -> Result<Sentence> {
        if s.is_empty() {
            return Ok(Sentence::empty());
        }
        let clause = Self::parse_clause(&self.parse_words(from, s)?)?;
        let to = from.other();
        match style {
            Style::HtSurrogate => {
                let clause = Clause { marker: None, ..clause };
                Ok(self.surface(to, &self.realize(&clause, to, &mut || 0)))
            }
            Style::Nature => {
                let mut rng = rng_for(self.spec.seed, fnv1a(&s.to_line()) ^ to as u64);
                let clause = Clause {
                    marker: rng.gen_bool(self.spec.p_marker).then(|| self.concept(Class::Marker, &mut rng)),
                    ..clause
                };
                Ok(self.surface(to, &self.realize_nature(&clause, to, &mut rng)))
            }
        }
    }

    /// A fresh Nature sentence of `side`.
    fn nature(&self, side: Side, rng: &mut ChaCha8Rng) -> Sentence {
        let c = self.sample_clause(rng);
        self.surface(side, &self.realize_nature(&c, side, rng))
    }

    /// Nature sentence on `original` plus its HT-surrogate translation.
    fn original_pair(&self, original: Side, rng: &mut ChaCha8Rng) -> (Sentence, Sentence) {
        let nat = self.nature(original, rng);
        let ht = self.translate(&nat, original, Style::HtSurrogate).expect("generated text parses");
        (nat, ht)
    }

    fn pair(&self, original: Side, rng: &mut ChaCha8Rng) -> SentencePair {
        let (nat, ht) = self.original_pair(original, rng);
        match original {
            Side::Source => SentencePair {
                source: nat,
                target: ht,
                source_provenance: Provenance::Nature,
                target_provenance: Provenance::Ht,
            },
            Side::Target => SentencePair {
                source: ht,
                target: nat,
                source_provenance: Provenance::Ht,
                target_provenance: Provenance::Nature,
            },
        }
    }
}

/// Every corpus of one world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldData {
    /// Half Nature→HT, half HT→Nature, interleaved.
    pub bitext: ParallelCorpus,
    pub source_mono: MonoCorpus,
    pub target_mono: MonoCorpus,
    /// Nature source, HT target.
    pub test_original: ParallelCorpus,
    /// HT source, Nature target.
    pub test_reverse: ParallelCorpus,
    /// Same distribution as the bitext.
    pub dev: ParallelCorpus,
}

pub fn generate_world(spec: &WorldSpec, sizes: &WorldSizes) -> Result<WorldData> {
    let world = World::new(spec.clone())?;
    if sizes.bitext == 0 || sizes.mono_source == 0 || sizes.mono_target == 0 || sizes.test == 0 || sizes.dev == 0 {
        return Err(Error::Config("all world sizes must be positive".into()));
    }
    if sizes.test * 10 > sizes.bitext {
        return Err(Error::Config("each test set may hold at most 10% of the bitext size".into()));
    }
    let (src, tgt) = (spec.source_language.as_str(), spec.target_language.as_str());
    let stream = |k: u64| rng_for(derive_seed(spec.seed, 0x3041d), k);

    let mut rng = stream(1);
    let mut bitext = ParallelCorpus::empty(src, tgt);
    for i in 0..sizes.bitext {
        let side = if i % 2 == 0 { Side::Source } else { Side::Target };
        bitext.push(world.pair(side, &mut rng))?;
    }
    let mut rng = stream(2);
    let source_mono = MonoCorpus::new(
        (0..sizes.mono_source).map(|_| world.nature(Side::Source, &mut rng)).collect(),
        src,
        Provenance::Nature,
    );
    let mut rng = stream(3);
    let target_mono = MonoCorpus::new(
        (0..sizes.mono_target).map(|_| world.nature(Side::Target, &mut rng)).collect(),
        tgt,
        Provenance::Nature,
    );

    let mut seen: HashSet<String> = HashSet::new();
    for p in &bitext.pairs {
        seen.insert(p.source.to_line());
        seen.insert(p.target.to_line());
    }
    seen.extend(source_mono.sentences.iter().map(Sentence::to_line));
    seen.extend(target_mono.sentences.iter().map(Sentence::to_line));

    // held-out sets draw until they have enough pairs unseen anywhere else
    let mut held_out = |original: Side, n: usize, k: u64| -> Result<ParallelCorpus> {
        let mut rng = stream(k);
        let mut out = ParallelCorpus::empty(src, tgt);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(Error::Config(
                    "vocabulary too small: cannot draw enough held-out sentences unseen in training".into(),
                ));
            }
            let p = world.pair(original, &mut rng);
            let (a, b) = (p.source.to_line(), p.target.to_line());
            if seen.contains(&a) || seen.contains(&b) {
                continue;
            }
            seen.insert(a);
            seen.insert(b);
            out.push(p)?;
        }
        Ok(out)
    };
    let test_original = held_out(Side::Source, sizes.test, 4)?;
    let test_reverse = held_out(Side::Target, sizes.test, 5)?;
    let mut dev = ParallelCorpus::empty(src, tgt);
    let half_o = held_out(Side::Source, sizes.dev.div_ceil(2), 6)?;
    let half_r = held_out(Side::Target, sizes.dev / 2, 7)?;
    for i in 0..sizes.dev {
        let p = if i % 2 == 0 { &half_o.pairs[i / 2] } else { &half_r.pairs[i / 2] };
        dev.push(p.clone())?;
    }
    Ok(WorldData { bitext, source_mono, target_mono, test_original, test_reverse, dev })
}

/// Ground-truth translation of a sentence generated by `world`. The input
/// language is recognised from its words; an empty sentence maps to itself.
pub fn oracle_translate(world: &World, s: &Sentence, style: Style) -> Result<Sentence> {
    let Some(first) = s.tokens.first() else {
        return Ok(Sentence::empty());
    };
    let side = if world.lexicon.parse.contains_key(&(Side::Source, first.clone())) {
        Side::Source
    } else {
        Side::Target
    };
    world.translate(s, side, style)
}

/// Re-renders a sentence in Nature style within its own language: content,
/// adverb side and word order are kept, synonyms and the marker are resampled
/// (seeded by the sentence text). An upper bound for learned style transfer.
pub fn oracle_restyle(world: &World, s: &Sentence) -> Result<Sentence> {
    let Some(first) = s.tokens.first() else {
        return Ok(Sentence::empty());
    };
    let side = if world.lexicon.parse.contains_key(&(Side::Source, first.clone())) {
        Side::Source
    } else {
        Side::Target
    };
    let clause = World::parse_clause(&world.parse_words(side, s)?)?;
    let mut rng = rng_for(world.spec.seed, fnv1a(&s.to_line()) ^ 0x7e57);
    let clause = Clause {
        marker: rng.gen_bool(world.spec.p_marker).then(|| world.concept(Class::Marker, &mut rng)),
        ..clause
    };
    let rng = std::cell::RefCell::new(rng);
    Ok(world.surface(side, &world.realize(&clause, side, &mut || world.pick_form(&mut rng.borrow_mut()))))
}

/// Type-token ratio of a corpus.
pub fn type_token_ratio<'a, I: IntoIterator<Item = &'a Sentence>>(sentences: I) -> f64 {
    let mut types = HashSet::new();
    let mut tokens = 0usize;
    for s in sentences {
        for t in s.iter() {
            types.insert(t.to_owned());
            tokens += 1;
        }
    }
    if tokens == 0 {
        0.0
    } else {
        types.len() as f64 / tokens as f64
    }
}
