use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{lr_schedule, optimizer_step, Moments};
use crate::analysis::{pair_samples, PairSample};
use crate::corpus::{generate_base_corpus, BatchScheduler, DataType, World};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Encoder, ModelConfig};
use crate::objectives::{total_loss, update_reweight_state, GateEntry, LossKey, LossLog, ReweightState};
use crate::tensor::{Tape, Tensor};

const DROPOUT_SALT: u64 = 0x6472_6f70;
const DATA_SALT: u64 = 0x6461_7461;

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Optimizer updates applied so far; the next batch index.
    pub step: u64,
    pub encoder: Encoder<f32>,
    pub moments: Moments<f32>,
    pub reweight: ReweightState,
    /// Loss of the first non-empty batch.
    pub initial_loss: Option<f64>,
    /// Consecutive steps above the divergence threshold.
    pub over_count: u64,
    /// Dev metric history for early stopping.
    pub dev_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub data_type: DataType,
    pub loss: f64,
    pub mean_ce: f64,
    pub predicted: usize,
    pub lr: f64,
}

/// A training run over one synthetic world.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub world: World,
    pub base: Vec<Vec<usize>>,
    pub state: TrainState,
    out: Option<PathBuf>,
    log: Option<LossLog>,
}

impl Trainer {
    pub fn new(mut cfg: TrainConfig) -> Result<Self> {
        let (world, base) = cfg.data.build()?;
        cfg.resolve(&world);
        cfg.validate()?;
        let encoder = Encoder::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let state = TrainState {
            step: 0,
            moments: Moments::zeros(&encoder.params),
            encoder,
            reweight: ReweightState::new(cfg.reweight),
            initial_loss: None,
            over_count: 0,
            dev_history: Vec::new(),
        };
        Ok(Self {
            cfg,
            world,
            base,
            state,
            out: None,
            log: None,
        })
    }

    /// Directs checkpoints, `loss_log.csv` and `run_manifest` to `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_manifest"), self.manifest())?;
        self.log = Some(LossLog::open(&dir.join("loss_log.csv"))?);
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Resolved config plus the derived seeds.
    pub fn manifest(&self) -> String {
        let mut s = self.cfg.to_text();
        s.push_str(&format!("init_seed={}\n", self.cfg.seed));
        s.push_str(&format!("data_seed={}\n", self.cfg.seed ^ DATA_SALT));
        s.push_str(&format!("dropout_seed={}\n", self.cfg.seed ^ DROPOUT_SALT));
        s.push_str(&format!("vocab_size={}\n", self.world.vocab.len()));
        s
    }

    pub fn scheduler(&self) -> Result<BatchScheduler<'_>> {
        scheduler(&self.cfg, &self.world, &self.base)
    }

    /// Runs `steps` more updates.
    pub fn run(&mut self, steps: u64) -> Result<Vec<StepReport>> {
        let sched = scheduler(&self.cfg, &self.world, &self.base)?;
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = step_once(&self.cfg, &sched, &mut self.state, self.log.as_mut());
            let r = match r {
                Err(e @ Error::Divergence { .. }) => {
                    if let Some(dir) = &self.out {
                        self.checkpoint().save(&dir.join("diverged.ckpt"))?;
                    }
                    return Err(e);
                }
                other => other?,
            };
            reports.push(r);
            let k = self.cfg.checkpoint_every;
            if k > 0 && self.state.step.is_multiple_of(k) {
                if let Some(dir) = &self.out {
                    let ck = self.checkpoint();
                    ck.save(&dir.join(format!("step{:08}.ckpt", self.state.step)))?;
                    ck.save(&dir.join("last.ckpt"))?;
                }
            }
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(reports)
    }

    /// Runs until `total_steps` and writes `final.ckpt` if an output
    /// directory is set.
    pub fn run_to_end(&mut self) -> Result<Vec<StepReport>> {
        let left = self.cfg.optim.total_steps.saturating_sub(self.state.step);
        let reports = self.run(left)?;
        if let Some(dir) = &self.out {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(reports)
    }

    /// Unmasked pairs of the first configured language pair, built from
    /// a base corpus the run never trains on.
    pub fn held_out_pairs(&self, limit: usize) -> Result<Vec<PairSample>> {
        let p = self
            .cfg
            .data
            .pairs
            .first()
            .ok_or_else(|| Error::Config("no language pair configured".into()))?;
        let base = generate_base_corpus(&self.world.grammar, self.cfg.data.corpus_seed.wrapping_add(1), limit);
        pair_samples(&self.world, &base, p.source, p.target, self.cfg.data.schedule.max_len)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let mut ck = Checkpoint::from_encoder(&s.encoder);
        for (k, v) in self.cfg.to_kv() {
            ck.meta.insert(format!("train.{k}"), v);
        }
        ck.meta.insert("step".into(), s.step.to_string());
        ck.meta.insert("opt.t".into(), s.moments.t.to_string());
        ck.meta.insert("over_count".into(), s.over_count.to_string());
        if let Some(l) = s.initial_loss {
            ck.meta.insert("initial_loss".into(), l.to_string());
        }
        let hist: Vec<String> = s.dev_history.iter().map(f64::to_string).collect();
        ck.meta.insert("dev_history".into(), hist.join(","));
        for (k, e) in &s.reweight.entries {
            ck.meta.insert(
                format!("reweight.{}.{}", k.language, k.data_type.name()),
                format!("{},{},{}", e.ema_ce, e.gamma_l, e.observations),
            );
        }
        for (i, (name, t)) in s.encoder.params.iter().enumerate() {
            for (tag, buf) in [("opt.m", &s.moments.m[i]), ("opt.v", &s.moments.v[i])] {
                let tensor = Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment shape");
                ck.tensors.push((format!("{tag}:{name}"), tensor));
            }
        }
        ck
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let kv = ck
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("train.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let mut cfg = TrainConfig::desk(ck.config.variant.kind);
        cfg.apply_kv(&kv)?;
        let mut t = Self::new(cfg)?;
        if t.cfg.model != ck.config {
            return Err(Error::Config("checkpoint model config disagrees with its training config".into()));
        }
        let meta = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
        let num = |k: &str| -> Result<u64> { meta(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}`"))) };
        let encoder = ck.encoder()?;
        let mut moments = Moments::zeros(&encoder.params);
        moments.t = num("opt.t")?;
        for (i, (name, _)) in encoder.params.iter().enumerate() {
            for (tag, dst) in [("opt.m", &mut moments.m[i]), ("opt.v", &mut moments.v[i])] {
                let src = ck
                    .tensor(&format!("{tag}:{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {tag} for `{name}`")))?;
                if src.numel() != dst.len() {
                    return Err(Error::Format(format!("{tag} for `{name}` has the wrong size")));
                }
                dst.copy_from_slice(src.data());
            }
        }
        let mut reweight = ReweightState::new(t.cfg.reweight);
        for (k, v) in &ck.meta {
            let Some(rest) = k.strip_prefix("reweight.") else { continue };
            let bad = || Error::Format(format!("bad reweight entry `{k}={v}`"));
            let (lang, dt) = rest.split_once('.').ok_or_else(bad)?;
            let data_type = match dt {
                "mono" => DataType::Mono,
                "bilingual" => DataType::Bilingual,
                _ => return Err(bad()),
            };
            let f: Vec<&str> = v.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let key = LossKey {
                language: lang.parse().map_err(|_| bad())?,
                data_type,
            };
            let entry = GateEntry {
                ema_ce: f[0].parse().map_err(|_| bad())?,
                gamma_l: f[1].parse().map_err(|_| bad())?,
                observations: f[2].parse().map_err(|_| bad())?,
            };
            reweight.entries.insert(key, entry);
        }
        let dev_history = meta("dev_history")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Format("bad dev_history".into())))
            .collect::<Result<_>>()?;
        t.state = TrainState {
            step: num("step")?,
            encoder,
            moments,
            reweight,
            initial_loss: match ck.meta.get("initial_loss") {
                Some(v) => Some(v.parse().map_err(|_| Error::Format("bad initial_loss".into()))?),
                None => None,
            },
            over_count: num("over_count")?,
            dev_history,
        };
        Ok(t)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.state.encoder.cfg
    }
}

fn scheduler<'w>(cfg: &TrainConfig, world: &'w World, base: &'w [Vec<usize>]) -> Result<BatchScheduler<'w>> {
    BatchScheduler::new(
        world,
        base,
        cfg.data.mono_languages.clone(),
        cfg.data.pairs.clone(),
        cfg.data.schedule.clone(),
        cfg.seed ^ DATA_SALT,
    )
}

fn step_once(
    cfg: &TrainConfig,
    sched: &BatchScheduler<'_>,
    state: &mut TrainState,
    log: Option<&mut LossLog>,
) -> Result<StepReport> {
    let step = state.step;
    let batch = sched.batch(step)?;
    let enc = &mut state.encoder;
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape);
    let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
    drng.set_stream(step);
    let l = total_loss(enc, &mut tape, &bound, &batch, &state.reweight, cfg.objective, Some(&mut drng))?;
    if !l.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }
    enc.params.zero_grads();
    if !l.empty {
        let grads = tape.backward(l.loss)?;
        enc.params.accumulate_grads(&bound.vars, &grads)?;
    }
    drop(tape);
    let lr = lr_schedule(step + 1, &cfg.optim);
    optimizer_step(&mut enc.params, &mut state.moments, &cfg.optim, lr)?;
    enc.params.zero_grads();

    state.reweight = update_reweight_state(&state.reweight, &l, step);
    if state.reweight.open_before_start(step) {
        return Err(Error::Numeric(format!("gate open before the start step at step {step}")));
    }
    if let Some(log) = log {
        log.record(step, &l, &state.reweight)?;
    }
    if !l.empty {
        let init = *state.initial_loss.get_or_insert(l.total);
        if l.total > cfg.divergence_factor * init {
            state.over_count += 1;
        } else {
            state.over_count = 0;
        }
        if state.over_count >= cfg.divergence_window {
            state.step += 1;
            return Err(Error::Divergence {
                step,
                reason: format!(
                    "loss {} above {}x the initial {} for {} steps",
                    l.total, cfg.divergence_factor, init, state.over_count
                ),
            });
        }
    }
    state.step += 1;
    Ok(StepReport {
        step,
        data_type: batch.data_type,
        loss: l.total,
        mean_ce: l.mean_ce(),
        predicted: l.predicted,
        lr,
    })
}
