use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Target value of positions that carry no prediction.
pub const IGNORE_INDEX: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    KeepVisible,
    MaskToken,
    RandomToken(usize),
    KeepButPredict,
}

impl MaskAction {
    pub fn is_predicted(self) -> bool {
        !matches!(self, Self::KeepVisible)
    }
}

/// Ids used when corrupting inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingVocab {
    pub mask_id: usize,
    /// Pool for random replacement (non-special ids).
    pub replacements: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    pub actions: Vec<MaskAction>,
    pub original: Vec<usize>,
    pub mask_id: usize,
    pub seed: u64,
}

impl MaskingPlan {
    /// Plan that predicts nothing.
    pub fn visible(tokens: &[usize], mask_id: usize) -> Self {
        Self {
            actions: vec![MaskAction::KeepVisible; tokens.len()],
            original: tokens.to_vec(),
            mask_id,
            seed: 0,
        }
    }

    /// Model input after corruption.
    pub fn inputs(&self) -> Vec<usize> {
        self.actions
            .iter()
            .zip(&self.original)
            .map(|(a, &t)| match *a {
                MaskAction::MaskToken => self.mask_id,
                MaskAction::RandomToken(r) => r,
                MaskAction::KeepVisible | MaskAction::KeepButPredict => t,
            })
            .collect()
    }

    /// Original ids at predicted positions, [`IGNORE_INDEX`] elsewhere.
    pub fn targets(&self) -> Vec<i64> {
        self.actions
            .iter()
            .zip(&self.original)
            .map(|(a, &t)| if a.is_predicted() { t as i64 } else { IGNORE_INDEX })
            .collect()
    }

    pub fn predicted(&self) -> usize {
        self.actions.iter().filter(|a| a.is_predicted()).count()
    }
}

/// Selects each eligible position with probability `rate`, then splits the
/// selection 80/10/10 into mask, random replacement and unchanged.
pub fn plan_masking(
    tokens: &[usize],
    ineligible: &[bool],
    rate: f64,
    vocab: &MaskingVocab,
    seed: u64,
) -> Result<MaskingPlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("masking rate {rate} outside [0, 1)")));
    }
    if ineligible.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} eligibility flags for {} tokens",
            ineligible.len(),
            tokens.len()
        )));
    }
    if vocab.replacements.is_empty() {
        return Err(Error::Config("no non-special ids for random replacement".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = tokens
        .iter()
        .zip(ineligible)
        .map(|(_, &skip)| {
            if skip || rng.random::<f64>() >= rate {
                return MaskAction::KeepVisible;
            }
            let u = rng.random::<f64>();
            if u < 0.8 {
                MaskAction::MaskToken
            } else if u < 0.9 {
                let i = rng.random_range(0..vocab.replacements.len());
                MaskAction::RandomToken(vocab.replacements[i])
            } else {
                MaskAction::KeepButPredict
            }
        })
        .collect();
    Ok(MaskingPlan {
        actions,
        original: tokens.to_vec(),
        mask_id: vocab.mask_id,
        seed,
    })
}
