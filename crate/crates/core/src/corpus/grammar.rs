use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};

use crate::error::{Error, Result};

/// Part-of-speech style class of a base word; also the tagging label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WordClass {
    Det,
    Noun,
    Verb,
    Adj,
    Prep,
}

impl WordClass {
    pub const ALL: [WordClass; 5] = [Self::Det, Self::Noun, Self::Verb, Self::Adj, Self::Prep];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Det => "DET",
            Self::Noun => "NOUN",
            Self::Verb => "VERB",
            Self::Adj => "ADJ",
            Self::Prep => "PREP",
        }
    }
}

/// One template slot; optional slots are filled with probability 1/2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub class: WordClass,
    pub optional: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub lexicon_size: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Sentence templates; an empty list is a degenerate grammar.
    pub templates: Vec<Vec<Slot>>,
}

fn req(class: WordClass) -> Slot {
    Slot {
        class,
        optional: false,
    }
}

fn opt(class: WordClass) -> Slot {
    Slot {
        class,
        optional: true,
    }
}

impl GrammarConfig {
    pub fn new(lexicon_size: usize, zipf_exponent: f64) -> Self {
        use WordClass::*;
        let np = |v: &mut Vec<Slot>| v.extend([req(Det), opt(Adj), req(Noun)]);
        let mut t1 = Vec::new();
        np(&mut t1);
        t1.push(req(Verb));
        np(&mut t1);
        let mut t2 = t1.clone();
        t2.push(req(Prep));
        np(&mut t2);
        let mut t3 = Vec::new();
        np(&mut t3);
        t3.extend([req(Prep), req(Det), req(Noun), req(Verb), opt(Adj)]);
        Self {
            lexicon_size,
            zipf_exponent,
            min_len: 4,
            max_len: 14,
            templates: vec![t1, t2, t3],
        }
    }
}

/// Word classes and Zipf sampling over a base lexicon of `0..lexicon_size`.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub cfg: GrammarConfig,
    class_of: Vec<WordClass>,
    words: Vec<Vec<usize>>,
    samplers: Vec<WeightedIndex<f64>>,
}

impl Grammar {
    pub fn new(cfg: GrammarConfig) -> Result<Self> {
        let n = cfg.lexicon_size;
        if n < 50 {
            return Err(Error::Config(format!("lexicon of {n} words; at least 50 needed")));
        }
        if cfg.templates.is_empty() || cfg.templates.iter().any(|t| t.iter().all(|s| s.optional)) {
            return Err(Error::Config("grammar has no productions".into()));
        }
        if !(cfg.zipf_exponent >= 0.0) || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            return Err(Error::Config(format!(
                "invalid grammar settings: exponent {}, lengths {}..={}",
                cfg.zipf_exponent, cfg.min_len, cfg.max_len
            )));
        }
        let shortest: usize = cfg.templates.iter().map(|t| t.iter().filter(|s| !s.optional).count()).min().unwrap_or(0);
        let longest: usize = cfg.templates.iter().map(Vec::len).max().unwrap_or(0);
        if shortest > cfg.max_len || longest < cfg.min_len {
            return Err(Error::Config("no template fits the sentence length range".into()));
        }
        // closed classes are small; the rest splits 45/30/25 between
        // nouns, verbs and adjectives
        let det = 4;
        let prep = 4;
        let open = n - det - prep;
        let nouns = open * 45 / 100;
        let verbs = open * 30 / 100;
        let adjs = open - nouns - verbs;
        let sizes = [
            (WordClass::Det, det),
            (WordClass::Noun, nouns),
            (WordClass::Verb, verbs),
            (WordClass::Adj, adjs),
            (WordClass::Prep, prep),
        ];
        let mut class_of = Vec::with_capacity(n);
        let mut words = vec![Vec::new(); WordClass::ALL.len()];
        for (class, size) in sizes {
            for _ in 0..size {
                words[class.index()].push(class_of.len());
                class_of.push(class);
            }
        }
        let samplers = words
            .iter()
            .map(|ws| {
                let w: Vec<f64> = (1..=ws.len()).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
                WeightedIndex::new(w).map_err(|e| Error::Config(format!("zipf weights: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            class_of,
            words,
            samplers,
        })
    }

    pub fn lexicon_size(&self) -> usize {
        self.class_of.len()
    }

    pub fn class_of(&self, word: usize) -> Option<WordClass> {
        self.class_of.get(word).copied()
    }

    pub fn words_of(&self, class: WordClass) -> &[usize] {
        &self.words[class.index()]
    }

    /// Draws one word of `class` by its Zipf rank.
    pub fn sample_word<R: Rng + ?Sized>(&self, class: WordClass, rng: &mut R) -> usize {
        let i = self.samplers[class.index()].sample(rng);
        self.words[class.index()][i]
    }

    pub fn sample_sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        loop {
            let t = &self.cfg.templates[rng.random_range(0..self.cfg.templates.len())];
            let mut s = Vec::with_capacity(t.len());
            for slot in t {
                if !slot.optional || rng.random::<bool>() {
                    s.push(self.sample_word(slot.class, rng));
                }
            }
            if (self.cfg.min_len..=self.cfg.max_len).contains(&s.len()) {
                return s;
            }
        }
    }
}

/// Sentences of base-lexicon word indices.
pub fn generate_base_corpus(grammar: &Grammar, seed: u64, num_sentences: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_sentences).map(|_| grammar.sample_sentence(&mut rng)).collect()
}
