use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grammar::Grammar;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Word-order transformation applied to every sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reorder {
    Identity,
    /// Split into blocks of `block` tokens (the last may be shorter) and
    /// reverse the block order; order inside a block is kept.
    BlockReverse { block: usize },
}

impl Reorder {
    /// `perm[i]` is the output position of input position `i`.
    pub fn permutation(self, n: usize) -> Vec<usize> {
        match self {
            Self::Identity => (0..n).collect(),
            Self::BlockReverse { block } => {
                let block = block.max(1);
                let starts: Vec<usize> = (0..n).step_by(block).collect();
                let mut perm = vec![0; n];
                let mut out = 0;
                for &s in starts.iter().rev() {
                    for (i, p) in (s..(s + block).min(n)).enumerate() {
                        perm[p] = out + i;
                    }
                    out += (s + block).min(n) - s;
                }
                perm
            }
        }
    }
}

/// A synthetic language: a bijective word map from the base lexicon into
/// its own vocabulary ids, plus a word-order rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguageSpec {
    pub language_id: usize,
    pub name: String,
    /// `substitution[w]` is the token id of base word `w`.
    pub substitution: Vec<usize>,
    pub reorder: Reorder,
    pub resource_weight: f64,
}

impl ToyLanguageSpec {
    /// Registers one token per base word in `vocab`. With a `cipher_seed`
    /// the base words are shuffled before being assigned ids.
    pub fn register(
        vocab: &mut Vocabulary,
        language_id: usize,
        name: &str,
        lexicon_size: usize,
        cipher_seed: Option<u64>,
        reorder: Reorder,
        resource_weight: f64,
    ) -> Result<Self> {
        let mut order: Vec<usize> = (0..lexicon_size).collect();
        if let Some(seed) = cipher_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let mut substitution = vec![0; lexicon_size];
        for (k, &w) in order.iter().enumerate() {
            substitution[w] = vocab.add(&format!("{name}_{k}"))?;
        }
        Ok(Self {
            language_id,
            name: name.to_string(),
            substitution,
            reorder,
            resource_weight,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if !self.substitution.iter().all(|t| seen.insert(*t)) {
            return Err(Error::Corpus(format!("substitution of `{}` is not injective", self.name)));
        }
        if !(self.resource_weight >= 0.0 && self.resource_weight.is_finite()) {
            return Err(Error::Corpus(format!("bad resource weight for `{}`", self.name)));
        }
        Ok(())
    }

    /// Base word of token `id`, if it belongs to this language.
    pub fn inverse(&self, id: usize) -> Option<usize> {
        self.substitution.iter().position(|&t| t == id)
    }

    pub fn owns(&self, id: usize) -> bool {
        self.inverse(id).is_some()
    }
}

/// Applies substitution then reordering. The alignment maps each base
/// position to its position in the derived sentence.
pub fn derive_language(base: &[usize], spec: &ToyLanguageSpec) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let perm = spec.reorder.permutation(base.len());
    let mut out = vec![0; base.len()];
    for (i, &w) in base.iter().enumerate() {
        let t = *spec.substitution.get(w).ok_or_else(|| {
            Error::Corpus(format!("base word {w} outside the lexicon of `{}`", spec.name))
        })?;
        out[perm[i]] = t;
    }
    Ok((out, (0..base.len()).map(|i| (i, perm[i])).collect()))
}

/// A translation pair with exact word alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// `(source index, target index)` pairs, sorted by source index.
    pub gold: Vec<(usize, usize)>,
    pub source_language: usize,
    pub target_language: usize,
}

/// Renders `base` in both languages and composes the alignments through it.
pub fn build_bilingual_example(
    base: &[usize],
    spec_a: &ToyLanguageSpec,
    spec_b: &ToyLanguageSpec,
) -> Result<ParallelExample> {
    let (source, to_a) = derive_language(base, spec_a)?;
    let (target, to_b) = derive_language(base, spec_b)?;
    let mut gold: Vec<(usize, usize)> = to_a.iter().zip(&to_b).map(|(&(_, a), &(_, b))| (a, b)).collect();
    gold.sort_unstable();
    Ok(ParallelExample {
        source,
        target,
        gold,
        source_language: spec_a.language_id,
        target_language: spec_b.language_id,
    })
}

/// Vocabulary, grammar and languages of one synthetic setting.
#[derive(Clone, Debug)]
pub struct World {
    pub vocab: Vocabulary,
    pub grammar: Grammar,
    pub languages: Vec<ToyLanguageSpec>,
}

impl World {
    /// Three languages over one grammar: `A` (base order), `B` (cipher,
    /// same order) and `C` (cipher, block-reversed order).
    pub fn standard(grammar: Grammar, seed: u64, block: usize) -> Result<Self> {
        let n = grammar.lexicon_size();
        let mut vocab = Vocabulary::new();
        let languages = vec![
            ToyLanguageSpec::register(&mut vocab, 0, "A", n, None, Reorder::Identity, 1.0)?,
            ToyLanguageSpec::register(&mut vocab, 1, "B", n, Some(seed ^ 0xB), Reorder::Identity, 1.0)?,
            ToyLanguageSpec::register(
                &mut vocab,
                2,
                "C",
                n,
                Some(seed ^ 0xC),
                Reorder::BlockReverse { block },
                1.0,
            )?,
        ];
        Ok(Self {
            vocab,
            grammar,
            languages,
        })
    }

    pub fn language(&self, id: usize) -> Result<&ToyLanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.language_id == id)
            .ok_or_else(|| Error::Corpus(format!("unknown language id {id}")))
    }

    pub fn language_by_name(&self, name: &str) -> Result<&ToyLanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Corpus(format!("unknown language `{name}`")))
    }

    pub fn num_languages(&self) -> usize {
        self.languages.iter().map(|l| l.language_id + 1).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GrammarConfig;
    use proptest::prelude::*;

    fn ident(id: usize, n: usize, reorder: Reorder) -> ToyLanguageSpec {
        ToyLanguageSpec {
            language_id: id,
            name: format!("L{id}"),
            substitution: (0..n).collect(),
            reorder,
            resource_weight: 1.0,
        }
    }

    #[test]
    fn identity_language_is_a_no_op() {
        let (s, a) = derive_language(&[3, 1, 2], &ident(0, 5, Reorder::Identity)).unwrap();
        assert_eq!(s, vec![3, 1, 2]);
        assert_eq!(a, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(derive_language(&[7], &ident(0, 5, Reorder::Identity)).is_err());
    }

    #[test]
    fn reversal_alignments() {
        let rev = Reorder::BlockReverse { block: 1 };
        let (_, a) = derive_language(&[0, 1, 2, 3], &ident(0, 5, rev)).unwrap();
        assert_eq!(a, vec![(0, 3), (1, 2), (2, 1), (3, 0)]);
        let ex = build_bilingual_example(&[4, 0, 2], &ident(0, 5, Reorder::Identity), &ident(1, 5, rev)).unwrap();
        assert_eq!(ex.gold, vec![(0, 2), (1, 1), (2, 0)]);
        assert_eq!(ex.target, vec![2, 0, 4]);
        let same = build_bilingual_example(&[4, 0, 2], &ident(1, 5, rev), &ident(1, 5, rev)).unwrap();
        assert_eq!(same.gold, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn block_reverse_keeps_block_order() {
        assert_eq!(Reorder::BlockReverse { block: 2 }.permutation(5), vec![3, 4, 1, 2, 0]);
        assert_eq!(Reorder::BlockReverse { block: 3 }.permutation(6), vec![3, 4, 5, 0, 1, 2]);
    }

    #[test]
    fn standard_world_has_disjoint_languages() {
        let g = Grammar::new(GrammarConfig::new(96, 1.1)).unwrap();
        let w = World::standard(g, 1, 3).unwrap();
        assert_eq!(w.vocab.len(), 5 + 3 * 96);
        for l in &w.languages {
            l.validate().unwrap();
        }
        assert!(w.languages[0].substitution.iter().all(|t| !w.languages[1].owns(*t)));
    }

    proptest! {
        #[test]
        fn substitution_and_alignment_are_bijections(
            seed in any::<u64>(),
            block in 1usize..5,
            base in prop::collection::vec(0usize..60, 1..20),
        ) {
            let mut vocab = Vocabulary::new();
            let a = ToyLanguageSpec::register(&mut vocab, 0, "A", 60, Some(seed), Reorder::Identity, 1.0).unwrap();
            let c = ToyLanguageSpec::register(&mut vocab, 1, "C", 60, Some(!seed), Reorder::BlockReverse { block }, 1.0).unwrap();
            let (s, _) = derive_language(&base, &a).unwrap();
            let back: Vec<usize> = s.iter().map(|&t| a.inverse(t).unwrap()).collect();
            prop_assert_eq!(&back, &base);
            let ex = build_bilingual_example(&base, &a, &c).unwrap();
            let mut src: Vec<usize> = ex.gold.iter().map(|p| p.0).collect();
            let mut tgt: Vec<usize> = ex.gold.iter().map(|p| p.1).collect();
            src.sort_unstable();
            tgt.sort_unstable();
            prop_assert_eq!(&src, &(0..base.len()).collect::<Vec<_>>());
            prop_assert_eq!(&tgt, &(0..base.len()).collect::<Vec<_>>());
            for &(i, j) in &ex.gold {
                prop_assert_eq!(a.inverse(ex.source[i]), c.inverse(ex.target[j]));
            }
        }
    }
}
