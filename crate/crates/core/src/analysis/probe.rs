//! Zero-shot transfer probes: a linear classifier trained on frozen
//! encoder features in one language and evaluated in others.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::hidden_states;
use crate::corpus::{bilingual_row, derive_language, ParallelExample, WordClass, World, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderInput, ForwardMode, ParamStore, Segment, SegmentLayout};
use crate::tensor::{Real, Tensor};
use crate::trainer::{early_stop, optimizer_step, Moments, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// The second sentence is the first with some words replaced. Were
    /// they replaced by words of the same class (label 1) or of another
    /// class (label 0)?
    PairClassification,
    /// Word class of every token.
    TokenTagging,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PairClassification => "pair_classification",
            Self::TokenTagging => "token_tagging",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What the pair probe reads from a jointly encoded pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairFeatures {
    /// The `[BOS]` state.
    Bos,
    /// `[u, v, |u - v|, u * v]` over the mean content states of each side.
    #[default]
    SegmentMeans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTask {
    pub kind: ProbeKind,
    pub train_language: usize,
    /// Zero-shot languages; must not contain the training language.
    pub eval_languages: Vec<usize>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Words replaced in the second sentence of a pair.
    pub substitutions: usize,
    pub pair_features: PairFeatures,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    /// Shuffle training labels (sanity control).
    pub permute_labels: bool,
}

impl ProbeTask {
    pub fn new(kind: ProbeKind, train_language: usize, eval_languages: Vec<usize>) -> Self {
        Self {
            kind,
            train_language,
            eval_languages,
            train_size: 1000,
            dev_size: 300,
            test_size: 300,
            substitutions: 1,
            pair_features: PairFeatures::default(),
            patience: 50,
            max_epochs: 300,
            lr: 1e-2,
            batch_size: 32,
            max_len: 64,
            permute_labels: false,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self.kind {
            ProbeKind::PairClassification => 2,
            ProbeKind::TokenTagging => crate::corpus::WordClass::ALL.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_languages.contains(&self.train_language) {
            return Err(Error::Config(format!(
                "evaluation languages {:?} include the training language {}",
                self.eval_languages, self.train_language
            )));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe splits and batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub kind: ProbeKind,
    pub seed: u64,
    pub train_language: usize,
    /// Held-out accuracy in the training language.
    pub in_language: f64,
    /// `(language, accuracy)` per zero-shot language.
    pub zero_shot: Vec<(usize, f64)>,
    pub epochs: usize,
    pub best_dev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub task: ProbeKind,
    pub train_lang: usize,
    pub eval_lang: usize,
    pub seed: u64,
    pub accuracy: f64,
}

impl ProbeOutcome {
    /// One row for the training language, then one per zero-shot language.
    pub fn rows(&self) -> Vec<ProbeRow> {
        let row = |eval_lang, accuracy| ProbeRow {
            task: self.kind,
            train_lang: self.train_language,
            eval_lang,
            seed: self.seed,
            accuracy,
        };
        std::iter::once(row(self.train_language, self.in_language))
            .chain(self.zero_shot.iter().map(|&(l, a)| row(l, a)))
            .collect()
    }
}

pub const PROBE_CSV_HEADER: &str = "task,train_lang,eval_lang,seed,accuracy";

pub fn write_probe_csv(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    let mut s = format!("{PROBE_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.task, r.train_lang, r.eval_lang, r.seed, r.accuracy));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Feature matrix (row-major, `dim` columns) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Softmax regression with Adam, early-stopped on dev accuracy.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub dim: usize,
    pub classes: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..self.classes).fold(0, |b, c| if z[c] > z[b] { c } else { b })
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = (0..data.len()).filter(|&i| self.predict(data.row(i)) == data.labels[i]).count();
        hits as f64 / data.len() as f64
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (k, &v) in x.iter().enumerate() {
            let v = (v - self.mean[k]) * self.scale[k];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += v * self.weight[k * self.classes + c];
            }
        }
        z
    }

    /// Trains on `train`, keeping the parameters of the best dev epoch.
    /// Returns the probe, the epochs run and the best dev accuracy.
    pub fn fit(train: &Dataset, dev: &Dataset, classes: usize, task: &ProbeTask, seed: u64) -> Result<(Self, usize, f64)> {
        let dim = train.dim;
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for i in 0..train.len() {
            for (k, v) in train.row(i).iter().enumerate() {
                mean[k] += v / n;
            }
        }
        for i in 0..train.len() {
            for (k, v) in train.row(i).iter().enumerate() {
                var[k] += (v - mean[k]).powi(2) / n;
            }
        }
        let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = Self {
            dim,
            classes,
            weight: (0..dim * classes).map(|_| rng.random_range(-0.01..0.01)).collect(),
            bias: vec![0.0; classes],
            mean,
            scale,
        };
        let mut store = ParamStore::<f64>::new();
        store.insert("probe.weight", Tensor::new(vec![dim, classes], probe.weight.clone())?.with_grad())?;
        store.insert("probe.bias", Tensor::new(vec![classes], probe.bias.clone())?.with_grad())?;
        let cfg = OptimizerConfig {
            lr: task.lr,
            clip_norm: None,
            ..Default::default()
        };
        let mut moments = Moments::zeros(&store);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::new();
        let mut best = (f64::NEG_INFINITY, probe.weight.clone(), probe.bias.clone());
        let mut epochs = 0;
        while epochs < task.max_epochs {
            epochs += 1;
            order.shuffle(&mut rng);
            for batch in order.chunks(task.batch_size) {
                let mut gw = vec![0.0; dim * classes];
                let mut gb = vec![0.0; classes];
                for &i in batch {
                    let x = train.row(i);
                    let z = probe.logits(x);
                    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for c in 0..classes {
                        let d = (e[c] / s - f64::from(u8::from(c == train.labels[i]))) / batch.len() as f64;
                        gb[c] += d;
                        for k in 0..dim {
                            gw[k * classes + c] += d * (x[k] - probe.mean[k]) * probe.scale[k];
                        }
                    }
                }
                store.zero_grads();
                store.get_mut(0).accumulate_grad(&gw)?;
                store.get_mut(1).accumulate_grad(&gb)?;
                optimizer_step(&mut store, &mut moments, &cfg, task.lr)?;
                probe.weight.copy_from_slice(store.get(0).data());
                probe.bias.copy_from_slice(store.get(1).data());
            }
            let acc = probe.accuracy(dev);
            if acc > best.0 {
                best = (acc, probe.weight.clone(), probe.bias.clone());
            }
            history.push(acc);
            if early_stop(&history, task.patience) {
                break;
            }
        }
        probe.weight = best.1;
        probe.bias = best.2;
        Ok((probe, epochs, best.0))
    }
}

fn check_balance(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if classes != 2 || labels.is_empty() {
        return Ok(());
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
    if !(0.1..=0.9).contains(&pos) {
        return Err(Error::Data(format!("{what}: label balance {pos:.3} beyond 90/10")));
    }
    Ok(())
}

/// Base sentence ids for train, dev and test, disjoint, drawn by `rng`.
fn split(base_len: usize, task: &ProbeTask, rng: &mut ChaCha8Rng) -> Result<[Vec<usize>; 3]> {
    let need = task.train_size + task.dev_size + task.test_size;
    if base_len < need {
        return Err(Error::Data(format!("probe needs {need} base sentences, corpus has {base_len}")));
    }
    let mut idx: Vec<usize> = (0..base_len).collect();
    idx.shuffle(rng);
    let test = idx[need - task.test_size..need].to_vec();
    let dev = idx[task.train_size..task.train_size + task.dev_size].to_vec();
    idx.truncate(task.train_size);
    Ok([idx, dev, test])
}

/// Base sentence pairs `(first, second, label)` for the pair task.
fn pair_items(world: &World, base: &[Vec<usize>], ids: &[usize], task: &ProbeTask, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<usize>, usize)> {
    let g = &world.grammar;
    ids.iter()
        .enumerate()
        .map(|(k, &i)| {
            let s = base[i].clone();
            let label = k % 2;
            let mut t = s.clone();
            let mut pos: Vec<usize> = (0..s.len()).collect();
            pos.shuffle(rng);
            for &p in pos.iter().take(task.substitutions.min(s.len())) {
                let own = g.class_of(s[p]).expect("base word");
                let class = if label == 1 {
                    own
                } else {
                    let others: Vec<WordClass> = WordClass::ALL.iter().copied().filter(|&c| c != own && !g.words_of(c).is_empty()).collect();
                    others[rng.random_range(0..others.len())]
                };
                if g.words_of(class).len() < 2 && class == own {
                    continue;
                }
                loop {
                    let w = g.sample_word(class, rng);
                    if w != s[p] {
                        t[p] = w;
                        break;
                    }
                }
            }
            (s, t, label)
        })
        .collect()
}

/// `[u, v, |u - v|, u * v]` where `u` and `v` are the mean content states
/// of the two segments of a jointly encoded pair.
fn pair_features(h: &[f64], input: &EncoderInput, d: usize) -> Vec<f64> {
    let mut u = vec![0.0; d];
    let mut v = vec![0.0; d];
    let (mut nu, mut nv) = (0usize, 0usize);
    for p in 0..input.len() {
        if !input.layout.is_content(p) {
            continue;
        }
        let (acc, n) = match input.layout.segment_of(p) {
            Segment::X => (&mut u, &mut nu),
            Segment::Y => (&mut v, &mut nv),
        };
        *n += 1;
        for (a, x) in acc.iter_mut().zip(&h[p * d..(p + 1) * d]) {
            *a += x;
        }
    }
    u.iter_mut().for_each(|x| *x /= nu.max(1) as f64);
    v.iter_mut().for_each(|x| *x /= nv.max(1) as f64);
    let mut f = Vec::with_capacity(4 * d);
    f.extend_from_slice(&u);
    f.extend_from_slice(&v);
    f.extend(u.iter().zip(&v).map(|(a, b)| (a - b).abs()));
    f.extend(u.iter().zip(&v).map(|(a, b)| a * b));
    f
}

fn pair_dataset<T: Real>(
    enc: &Encoder<T>,
    world: &World,
    items: &[(Vec<usize>, Vec<usize>, usize)],
    language: usize,
    task: &ProbeTask,
) -> Result<Dataset> {
    let spec = world.language(language)?;
    let inputs = items
        .iter()
        .map(|(a, b, _)| {
            let ex = ParallelExample {
                source: derive_language(a, spec)?.0,
                target: derive_language(b, spec)?.0,
                gold: Vec::new(),
                source_language: language,
                target_language: language,
            };
            let row = bilingual_row(&ex, task.max_len)?;
            EncoderInput::new(row.tokens, row.layout)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = enc.cfg.d_model;
    let hidden = hidden_states(enc, &inputs, ForwardMode::Full)?;
    let (dim, features) = match task.pair_features {
        PairFeatures::Bos => (d, hidden.iter().flat_map(|h| h[..d].to_vec()).collect()),
        PairFeatures::SegmentMeans => (4 * d, hidden.iter().zip(&inputs).flat_map(|(h, x)| pair_features(h, x, d)).collect()),
    };
    Ok(Dataset {
        dim,
        features,
        labels: items.iter().map(|x| x.2).collect(),
    })
}

fn tagging_dataset<T: Real>(enc: &Encoder<T>, world: &World, base: &[Vec<usize>], ids: &[usize], language: usize, max_len: usize) -> Result<Dataset> {
    let spec = world.language(language)?;
    let mut inputs = Vec::with_capacity(ids.len());
    let mut tags = Vec::with_capacity(ids.len());
    for &i in ids {
        let s = &base[i];
        let n = s.len().min(max_len.saturating_sub(2));
        let s = &s[..n];
        let (tokens, align) = derive_language(s, spec)?;
        let mut row_tags = vec![0; n];
        for (b, p) in align {
            row_tags[p] = world.grammar.class_of(s[b]).expect("base word").index();
        }
        let mut row = vec![BOS];
        row.extend(tokens);
        row.push(EOS);
        let mut special = vec![false; n + 2];
        special[0] = true;
        special[n + 1] = true;
        inputs.push(EncoderInput::new(row, SegmentLayout::mono(n + 2, language, special)?)?);
        tags.push(row_tags);
    }
    let mode = if enc.cfg.variant.kind.is_decomposed() {
        ForwardMode::IaOnly
    } else {
        ForwardMode::Full
    };
    let d = enc.cfg.d_model;
    let hidden = hidden_states(enc, &inputs, mode)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (h, t) in hidden.iter().zip(&tags) {
        for (p, &tag) in t.iter().enumerate() {
            features.extend_from_slice(&h[(p + 1) * d..(p + 2) * d]);
            labels.push(tag);
        }
    }
    Ok(Dataset { dim: d, features, labels })
}

fn run_probe(
    task: &ProbeTask,
    seed: u64,
    mut train: Dataset,
    dev: Dataset,
    test: Dataset,
    zero_shot: Vec<(usize, Dataset)>,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome> {
    let classes = task.num_labels();
    for (d, what) in [(&train, "train"), (&dev, "dev"), (&test, "test")] {
        check_balance(&d.labels, classes, what)?;
    }
    if task.permute_labels {
        train.labels.shuffle(rng);
    }
    let (probe, epochs, best_dev) = LinearProbe::fit(&train, &dev, classes, task, seed)?;
    Ok(ProbeOutcome {
        kind: task.kind,
        seed,
        train_language: task.train_language,
        in_language: probe.accuracy(&test),
        zero_shot: zero_shot.iter().map(|(l, d)| (*l, probe.accuracy(d))).collect(),
        epochs,
        best_dev,
    })
}

/// Features of jointly encoded same-language sentence pairs; the classifier is
/// fit in the training language and applied unchanged elsewhere.
pub fn probe_pair_classification<T: Real>(enc: &Encoder<T>, world: &World, base: &[Vec<usize>], task: &ProbeTask, seed: u64) -> Result<ProbeOutcome> {
    task.validate()?;
    if task.kind != ProbeKind::PairClassification {
        return Err(Error::Config("not a pair classification task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [tr, dv, te] = split(base.len(), task, &mut rng)?;
    let mut items = |ids: &[usize]| {
        let mut v = pair_items(world, base, ids, task, &mut rng);
        v.shuffle(&mut rng);
        v
    };
    let (tr, dv, te) = (items(&tr), items(&dv), items(&te));
    let l = task.train_language;
    let train = pair_dataset(enc, world, &tr, l, task)?;
    let dev = pair_dataset(enc, world, &dv, l, task)?;
    let test = pair_dataset(enc, world, &te, l, task)?;
    let zero_shot = task
        .eval_languages
        .iter()
        .map(|&e| Ok((e, pair_dataset(enc, world, &te, e, task)?)))
        .collect::<Result<Vec<_>>>()?;
    run_probe(task, seed, train, dev, test, zero_shot, &mut rng)
}

/// Per-token word-class tagging on last-layer states; decomposed models
/// run their intra-lingual sublayers only.
pub fn probe_token_tagging<T: Real>(enc: &Encoder<T>, world: &World, base: &[Vec<usize>], task: &ProbeTask, seed: u64) -> Result<ProbeOutcome> {
    task.validate()?;
    if task.kind != ProbeKind::TokenTagging {
        return Err(Error::Config("not a token tagging task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [tr, dv, te] = split(base.len(), task, &mut rng)?;
    let l = task.train_language;
    let train = tagging_dataset(enc, world, base, &tr, l, task.max_len)?;
    let dev = tagging_dataset(enc, world, base, &dv, l, task.max_len)?;
    let test = tagging_dataset(enc, world, base, &te, l, task.max_len)?;
    let zero_shot = task
        .eval_languages
        .iter()
        .map(|&e| Ok((e, tagging_dataset(enc, world, base, &te, e, task.max_len)?)))
        .collect::<Result<Vec<_>>>()?;
    run_probe(task, seed, train, dev, test, zero_shot, &mut rng)
}
