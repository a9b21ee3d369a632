use std::collections::BTreeMap;
use std::str::FromStr;

use super::optim::{OptimizerConfig, OptimizerKind};
use crate::corpus::{generate_base_corpus, Grammar, GrammarConfig, PairStream, ScheduleConfig, World};
use crate::error::{Error, Result};
use crate::model::{parse_kv, ModelConfig, VariantKind};
use crate::objectives::{LossMode, ReweightConfig};

/// Synthetic world and batch schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub lexicon_size: usize,
    pub zipf_exponent: f64,
    /// Base sentences shared by every language.
    pub corpus_size: usize,
    /// Block length of the reordered language.
    pub block: usize,
    pub corpus_seed: u64,
    pub mono_languages: Vec<usize>,
    pub pairs: Vec<PairStream>,
    pub schedule: ScheduleConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            lexicon_size: 96,
            zipf_exponent: 1.1,
            corpus_size: 20_000,
            block: 3,
            corpus_seed: 0,
            mono_languages: vec![0, 1, 2],
            pairs: vec![
                PairStream { source: 0, target: 2, weight: 1.0 },
                PairStream { source: 2, target: 0, weight: 1.0 },
            ],
            schedule: ScheduleConfig::default(),
        }
    }
}

impl DataConfig {
    /// World and base corpus for this config.
    pub fn build(&self) -> Result<(World, Vec<Vec<usize>>)> {
        let grammar = Grammar::new(GrammarConfig::new(self.lexicon_size, self.zipf_exponent))?;
        let base = generate_base_corpus(&grammar, self.corpus_seed, self.corpus_size);
        Ok((World::standard(grammar, self.corpus_seed, self.block)?, base))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `vocab_size` and `num_languages` are overwritten from the world.
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimizerConfig,
    pub objective: LossMode,
    pub reweight: ReweightConfig,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub divergence_factor: f64,
    pub divergence_window: u64,
}

impl TrainConfig {
    /// Desk-scale run of the given variant.
    pub fn desk(kind: VariantKind) -> Self {
        let data = DataConfig::default();
        let vocab = crate::corpus::NUM_SPECIALS + 3 * data.lexicon_size;
        Self {
            model: ModelConfig::desk(kind, vocab, 3),
            optim: OptimizerConfig {
                batch_size: data.schedule.batch_size,
                ..Default::default()
            },
            data,
            objective: LossMode::PlainCe,
            reweight: ReweightConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.optim.batch_size != self.data.schedule.batch_size {
            return Err(Error::Config("optimizer and schedule batch sizes differ".into()));
        }
        if self.data.schedule.max_len > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_len {} exceeds max_positions {}",
                self.data.schedule.max_len, self.model.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.reweight.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.divergence_window == 0 || !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_window must be > 0 and factor > 1".into()));
        }
        Ok(())
    }

    /// Syncs the model's vocabulary and language count with `world`.
    pub fn resolve(&mut self, world: &World) {
        self.model.vocab_size = world.vocab.len();
        self.model.num_languages = world.num_languages();
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_kv();
        let d = &self.data;
        let o = &self.optim;
        let r = &self.reweight;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let pairs = d
            .pairs
            .iter()
            .map(|p| format!("{}-{}:{}", p.source, p.target, p.weight))
            .collect::<Vec<_>>()
            .join(",");
        for (k, v) in [
            ("lexicon_size", d.lexicon_size.to_string()),
            ("zipf_exponent", d.zipf_exponent.to_string()),
            ("corpus_size", d.corpus_size.to_string()),
            ("block", d.block.to_string()),
            ("corpus_seed", d.corpus_seed.to_string()),
            ("mono_languages", list(&d.mono_languages)),
            ("pairs", pairs),
            ("mono_per_cycle", d.schedule.mono_per_cycle.to_string()),
            ("bilingual_per_cycle", d.schedule.bilingual_per_cycle.to_string()),
            ("batch_size", d.schedule.batch_size.to_string()),
            ("max_len", d.schedule.max_len.to_string()),
            ("mask_rate", d.schedule.mask_rate.to_string()),
            ("optimizer", o.kind.to_string()),
            ("lr", o.lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("warmup_steps", o.warmup_steps.to_string()),
            ("total_steps", o.total_steps.to_string()),
            ("clip_norm", o.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("objective", self.objective.to_string()),
            ("alpha", r.alpha.to_string()),
            ("gamma", r.gamma.to_string()),
            ("loss_threshold", r.loss_threshold.to_string()),
            ("start_step", r.start_step.to_string()),
            ("ema_decay", r.ema_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("divergence_factor", self.divergence_factor.to_string()),
            ("divergence_window", self.divergence_window.to_string()),
        ] {
            m.insert(k.to_string(), v);
        }
        m
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Overrides fields from `kv`; unknown keys are a config error.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let model_keys = self.model.to_kv();
        // a variant switch re-derives the shape before explicit overrides
        if let Some(v) = kv.get("variant") {
            let kind: VariantKind = v.parse()?;
            if kind != self.model.variant.kind {
                let m = &self.model;
                let d = m.embedding_dim;
                self.model = ModelConfig::sized(kind, m.vocab_size, m.num_languages, d, m.num_heads, m.num_layers, m.ffn_dim, m.max_positions);
            }
        }
        self.model.apply_kv(kv)?;
        for (k, v) in kv {
            match k.as_str() {
                "lexicon_size" => self.data.lexicon_size = parse(k, v)?,
                "zipf_exponent" => self.data.zipf_exponent = parse(k, v)?,
                "corpus_size" => self.data.corpus_size = parse(k, v)?,
                "block" => self.data.block = parse(k, v)?,
                "corpus_seed" => self.data.corpus_seed = parse(k, v)?,
                "mono_languages" => {
                    self.data.mono_languages = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse(k, s))
                        .collect::<Result<_>>()?
                }
                "pairs" => self.data.pairs = parse_pairs(v)?,
                "mono_per_cycle" => self.data.schedule.mono_per_cycle = parse(k, v)?,
                "bilingual_per_cycle" => self.data.schedule.bilingual_per_cycle = parse(k, v)?,
                "batch_size" => {
                    self.data.schedule.batch_size = parse(k, v)?;
                    self.optim.batch_size = self.data.schedule.batch_size;
                }
                "max_len" => self.data.schedule.max_len = parse(k, v)?,
                "mask_rate" => self.data.schedule.mask_rate = parse(k, v)?,
                "optimizer" => self.optim.kind = v.parse::<OptimizerKind>()?,
                "lr" => self.optim.lr = parse(k, v)?,
                "beta1" => self.optim.beta1 = parse(k, v)?,
                "beta2" => self.optim.beta2 = parse(k, v)?,
                "eps" => self.optim.eps = parse(k, v)?,
                "weight_decay" => self.optim.weight_decay = parse(k, v)?,
                "warmup_steps" => self.optim.warmup_steps = parse(k, v)?,
                "total_steps" => self.optim.total_steps = parse(k, v)?,
                "clip_norm" => self.optim.clip_norm = if v == "none" { None } else { Some(parse(k, v)?) },
                "objective" => self.objective = v.parse()?,
                "alpha" => self.reweight.alpha = parse(k, v)?,
                "gamma" => self.reweight.gamma = parse(k, v)?,
                "loss_threshold" => self.reweight.loss_threshold = parse(k, v)?,
                "start_step" => self.reweight.start_step = parse(k, v)?,
                "ema_decay" => self.reweight.ema_decay = parse(k, v)?,
                "seed" => {
                    self.seed = parse(k, v)?;
                    self.optim.seed = self.seed;
                }
                "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
                "divergence_factor" => self.divergence_factor = parse(k, v)?,
                "divergence_window" => self.divergence_window = parse(k, v)?,
                _ if model_keys.contains_key(k) => {}
                _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        Ok(())
    }

    /// Desk defaults of the variant named by `variant` (default `da`),
    /// overridden by the key=value text.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let kind = kv.get("variant").map_or(Ok(VariantKind::Da), |v| v.parse())?;
        let mut cfg = Self::desk(kind);
        cfg.apply_kv(&kv)?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// `src-tgt[:weight],…`
fn parse_pairs(v: &str) -> Result<Vec<PairStream>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (pair, weight) = item.split_once(':').unwrap_or((item, "1"));
            let (a, b) = pair
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad pair `{item}`")))?;
            Ok(PairStream {
                source: parse("pairs", a)?,
                target: parse("pairs", b)?,
                weight: parse("pairs", weight)?,
            })
        })
        .collect()
}
