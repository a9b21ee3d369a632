//! Encoder architectures: mixed attention (MA) and decomposed attention
//! (DA) with its reduce and share variants.

mod accounting;
mod checkpoint;
mod config;
mod encoder;
mod layout;
mod params;

pub use accounting::{count_parameters, ParameterReport};
pub use checkpoint::Checkpoint;
pub use config::{parse_kv, CaProjection, EncoderVariant, ModelConfig, VariantKind};
pub use encoder::{
    multi_head_attention, AttentionRecord, AttentionTag, AttentionWeights, Bound, Encoder,
    EncoderInput, ForwardMode, ForwardOptions, ForwardOutput, Linear,
};
pub use layout::{Segment, SegmentLayout};
pub use params::{Init, ParamId, ParamStore};
