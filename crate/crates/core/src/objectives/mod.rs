//! Masked-prediction objectives, focal weighting and the per-language gate.

mod log;
mod loss;
mod masking;
mod reweight;

pub use log::{LossLog, LOSS_LOG_HEADER};
pub use loss::{
    batch_loss, focal_weight, mmlm_loss, total_loss, trans_loss, KeyLoss, LossBreakdown, Weighting,
};
pub use masking::{plan_masking, MaskAction, MaskingPlan, MaskingVocab, IGNORE_INDEX};
pub use reweight::{GateEntry, LossKey, LossMode, ReweightConfig, ReweightState};

/// Functional form of [`ReweightState::update`].
pub fn update_reweight_state(state: &ReweightState, breakdown: &LossBreakdown, step: u64) -> ReweightState {
    let mut next = state.clone();
    next.update(breakdown.mean_ce_by_key(), step);
    next
}
