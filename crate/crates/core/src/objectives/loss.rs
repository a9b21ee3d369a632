use std::collections::BTreeMap;

use rand::RngCore;

use super::masking::IGNORE_INDEX;
use super::reweight::{LossKey, LossMode, ReweightState};
use crate::corpus::{Batch, DataType};
use crate::error::{Error, Result};
use crate::model::{Bound, Encoder, ForwardMode, ForwardOptions};
use crate::tensor::{Real, Tape, Var};

/// `α (1 − p_t)^γ`. Treated as a constant by the losses below.
pub fn focal_weight(p_t: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_t) {
        return Err(Error::Numeric(format!("p_t = {p_t} outside [0, 1]")));
    }
    Ok(alpha * (1.0 - p_t).powf(gamma))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KeyLoss {
    pub sum_ce: f64,
    pub count: usize,
}

impl KeyLoss {
    pub fn mean_ce(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_ce / self.count as f64
        }
    }
}

/// Loss of one batch with everything needed to recompute it.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    /// Scalar loss node on the tape.
    pub loss: Var,
    pub total: f64,
    pub predicted: usize,
    /// No position carried a target; the loss is 0.
    pub empty: bool,
    pub per_key: BTreeMap<LossKey, KeyLoss>,
    /// Per predicted position, in batch order.
    pub position_ce: Vec<f64>,
    pub target_prob: Vec<f64>,
    pub weights: Vec<f64>,
    pub position_keys: Vec<LossKey>,
}

impl LossBreakdown {
    /// `Σ w_i CE_i / count`, from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        if self.predicted == 0 {
            return 0.0;
        }
        let s: f64 = self.weights.iter().zip(&self.position_ce).map(|(w, c)| w * c).sum();
        s / self.predicted as f64
    }

    /// Unweighted mean CE over all predicted positions.
    pub fn mean_ce(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.position_ce.iter().sum::<f64>() / self.predicted as f64
        }
    }

    pub fn mean_ce_by_key(&self) -> impl Iterator<Item = (&LossKey, f64)> {
        self.per_key.iter().map(|(k, v)| (k, v.mean_ce()))
    }
}

/// Where the per-position weights come from.
#[derive(Clone, Copy, Debug)]
pub enum Weighting<'a> {
    Mode(LossMode, &'a ReweightState),
    /// Weights given up front, one per predicted position.
    Fixed(&'a [f64]),
}

/// Weighted mean CE over the predicted positions of `batch`.
pub fn batch_loss<T: Real>(
    enc: &Encoder<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
    weighting: Weighting<'_>,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<LossBreakdown> {
    batch.validate()?;
    let opts = ForwardOptions {
        mode: ForwardMode::Full,
        record: false,
        dropout_rng,
    };
    let out = enc.forward(tape, bound, &batch.inputs, opts)?;
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut keys = Vec::new();
    for (r, (input, tgt)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        for (p, &t) in tgt.iter().enumerate() {
            if t != IGNORE_INDEX {
                ids.push(out.offsets[r] + p);
                targets.push(t);
                keys.push(LossKey {
                    language: input.languages[p],
                    data_type: batch.data_type,
                });
            }
        }
    }
    if ids.is_empty() {
        let loss = tape.constant(&[1], vec![T::zero()])?;
        return Ok(LossBreakdown {
            loss,
            total: 0.0,
            predicted: 0,
            empty: true,
            per_key: BTreeMap::new(),
            position_ce: vec![],
            target_prob: vec![],
            weights: vec![],
            position_keys: vec![],
        });
    }
    let logits = enc.lm_head(tape, bound, out.hidden, Some(&ids))?;
    let vocab = enc.cfg.vocab_size;
    let (mut position_ce, mut target_prob) = (Vec::new(), Vec::new());
    for (row, &t) in tape.value(logits).chunks(vocab).zip(&targets) {
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        let ce = lse - row[t as usize].as_f64();
        position_ce.push(ce);
        target_prob.push((-ce).exp().clamp(0.0, 1.0));
    }
    let weights: Vec<f64> = match weighting {
        Weighting::Fixed(w) => {
            if w.len() != ids.len() {
                return Err(Error::Shape(format!(
                    "{} fixed weights for {} predicted positions",
                    w.len(),
                    ids.len()
                )));
            }
            w.to_vec()
        }
        Weighting::Mode(mode, state) => {
            let (alpha, gamma) = (state.cfg.alpha, state.cfg.gamma);
            target_prob
                .iter()
                .zip(&keys)
                .map(|(&p, k)| match mode {
                    LossMode::PlainCe => focal_weight(p, 1.0, 0.0),
                    LossMode::NaiveFl => focal_weight(p, alpha, gamma),
                    LossMode::AdaptiveFl => focal_weight(p, alpha, state.gamma_for(*k)),
                })
                .collect::<Result<_>>()?
        }
    };
    let tw: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
    let ce = tape.weighted_cross_entropy(logits, &targets, IGNORE_INDEX, &tw, None)?;
    // the tape's own CE is the precision-faithful value; keep it per position
    position_ce = ce.per_position.iter().map(|c| c.as_f64()).collect();
    let mut per_key: BTreeMap<LossKey, KeyLoss> = BTreeMap::new();
    for (k, &c) in keys.iter().zip(&position_ce) {
        let e = per_key.entry(*k).or_default();
        e.sum_ce += c;
        e.count += 1;
    }
    Ok(LossBreakdown {
        loss: ce.loss,
        total: tape.value(ce.loss)[0].as_f64(),
        predicted: ids.len(),
        empty: false,
        per_key,
        position_ce,
        target_prob,
        weights,
        position_keys: keys,
    })
}

pub fn total_loss<T: Real>(
    enc: &Encoder<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
    state: &ReweightState,
    mode: LossMode,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<LossBreakdown> {
    batch_loss(enc, tape, bound, batch, Weighting::Mode(mode, state), dropout_rng)
}

fn plain<T: Real>(
    enc: &Encoder<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
    want: DataType,
) -> Result<LossBreakdown> {
    if batch.data_type != want {
        return Err(Error::Data(format!(
            "expected a {want:?} batch, got {:?}",
            batch.data_type
        )));
    }
    let state = ReweightState::new(Default::default());
    total_loss(enc, tape, bound, batch, &state, LossMode::PlainCe, None)
}

/// Masked-LM cross-entropy on a monolingual batch.
pub fn mmlm_loss<T: Real>(
    enc: &Encoder<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
) -> Result<LossBreakdown> {
    plain(enc, tape, bound, batch, DataType::Mono)
}

/// Masked prediction over both halves of translation pairs.
pub fn trans_loss<T: Real>(
    enc: &Encoder<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch,
) -> Result<LossBreakdown> {
    plain(enc, tape, bound, batch, DataType::Bilingual)
}
