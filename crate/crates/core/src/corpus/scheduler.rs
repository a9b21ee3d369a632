use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};

use super::batch::{make_batch, pack_ranges, Batch, DataType, Example, MonoSentence};
use super::language::{build_bilingual_example, derive_language, World};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Mono batches per cycle, followed by `bilingual_per_cycle` bilingual ones.
    pub mono_per_cycle: usize,
    pub bilingual_per_cycle: usize,
    /// Rows per batch.
    pub batch_size: usize,
    pub max_len: usize,
    pub mask_rate: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mono_per_cycle: 1,
            bilingual_per_cycle: 1,
            batch_size: 32,
            max_len: 64,
            mask_rate: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairStream {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Deterministic source of training batches. Batch `k` is a pure function
/// of `(seed, k)`, so iteration can resume at any index.
#[derive(Clone, Debug)]
pub struct BatchScheduler<'w> {
    world: &'w World,
    base: &'w [Vec<usize>],
    mono: Vec<usize>,
    mono_pick: Option<WeightedIndex<f64>>,
    pairs: Vec<PairStream>,
    pair_pick: Option<WeightedIndex<f64>>,
    pub cfg: ScheduleConfig,
    seed: u64,
}

fn picker(weights: impl Iterator<Item = f64>, what: &str) -> Result<Option<WeightedIndex<f64>>> {
    let w: Vec<f64> = weights.collect();
    if w.is_empty() {
        return Ok(None);
    }
    WeightedIndex::new(w)
        .map(Some)
        .map_err(|e| Error::Scheduler(format!("{what} weights: {e}")))
}

impl<'w> BatchScheduler<'w> {
    /// `mono` lists language ids sampled by their resource weight.
    pub fn new(
        world: &'w World,
        base: &'w [Vec<usize>],
        mono: Vec<usize>,
        pairs: Vec<PairStream>,
        cfg: ScheduleConfig,
        seed: u64,
    ) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Scheduler("empty base corpus".into()));
        }
        if cfg.mono_per_cycle + cfg.bilingual_per_cycle == 0 || cfg.batch_size == 0 {
            return Err(Error::Scheduler("schedule produces no batches".into()));
        }
        if cfg.mono_per_cycle > 0 && mono.is_empty() {
            return Err(Error::Scheduler("schedule needs a monolingual stream".into()));
        }
        if cfg.bilingual_per_cycle > 0 && pairs.is_empty() {
            return Err(Error::Scheduler("schedule needs a bilingual stream".into()));
        }
        let weights = mono
            .iter()
            .map(|&l| world.language(l).map(|s| s.resource_weight))
            .collect::<Result<Vec<_>>>()?;
        for p in &pairs {
            world.language(p.source)?;
            world.language(p.target)?;
        }
        Ok(Self {
            mono_pick: picker(weights.into_iter(), "language")?,
            pair_pick: picker(pairs.iter().map(|p| p.weight), "pair")?,
            world,
            base,
            mono,
            pairs,
            cfg,
            seed,
        })
    }

    pub fn data_type(&self, index: u64) -> DataType {
        let cycle = (self.cfg.mono_per_cycle + self.cfg.bilingual_per_cycle) as u64;
        if index % cycle < self.cfg.mono_per_cycle as u64 {
            DataType::Mono
        } else {
            DataType::Bilingual
        }
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(index);
        r
    }

    /// Index of the pair stream used by batch `index` (bilingual batches).
    pub fn pair_of(&self, index: u64) -> Option<PairStream> {
        (self.data_type(index) == DataType::Bilingual).then(|| {
            let mut rng = self.rng(index);
            self.pairs[self.pair_pick.as_ref().expect("checked").sample(&mut rng)]
        })
    }

    pub fn batch(&self, index: u64) -> Result<Batch> {
        let mut rng = self.rng(index);
        let cfg = &self.cfg;
        match self.data_type(index) {
            DataType::Mono => {
                let lang = self.mono[self.mono_pick.as_ref().expect("checked").sample(&mut rng)];
                let spec = self.world.language(lang)?;
                // draw sentences until they fill batch_size packed rows
                let mut sents = Vec::new();
                let mut lengths = Vec::new();
                loop {
                    let base = &self.base[rng.random_range(0..self.base.len())];
                    lengths.push(base.len());
                    if pack_ranges(&lengths, cfg.max_len).len() > cfg.batch_size {
                        break;
                    }
                    let (tokens, _) = derive_language(base, spec)?;
                    sents.push(Example::Mono(MonoSentence { language: lang, tokens }));
                }
                make_batch(&sents, DataType::Mono, &self.world.vocab, cfg.max_len, cfg.mask_rate, &mut rng)
            }
            DataType::Bilingual => {
                let p = self.pairs[self.pair_pick.as_ref().expect("checked").sample(&mut rng)];
                let (a, b) = (self.world.language(p.source)?, self.world.language(p.target)?);
                let examples = (0..cfg.batch_size)
                    .map(|_| {
                        let base = &self.base[rng.random_range(0..self.base.len())];
                        build_bilingual_example(base, a, b).map(Example::Parallel)
                    })
                    .collect::<Result<Vec<_>>>()?;
                make_batch(&examples, DataType::Bilingual, &self.world.vocab, cfg.max_len, cfg.mask_rate, &mut rng)
            }
        }
    }

    /// Batches `start, start + 1, …`.
    pub fn iter_from(&self, start: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        (start..).map(move |i| self.batch(i))
    }
}
