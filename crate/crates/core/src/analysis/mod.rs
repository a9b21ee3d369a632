//! Alignment and attention-mass metrics, heatmap export, parameter
//! reports and zero-shot transfer probes.

mod align;
mod eval;
mod heatmap;
mod probe;
mod report;

pub use align::{alignment_accuracy, alignment_from_matrix, mass_balance, AlignmentScore, DirectionScore, MassBalance, RowMass};
pub use eval::{alignment_tag, collect_records, evaluate_alignment, evaluate_mass, hidden_states, pair_samples, AlignmentEval, PairSample};
pub use heatmap::{export_heatmap, pgm_pixel, read_heatmap_csv, HeatmapCsv, HeatmapFiles, HEATMAP_SCALE};
pub use probe::{
    probe_pair_classification, probe_token_tagging, write_probe_csv, Dataset, LinearProbe, PairFeatures, ProbeKind, ProbeOutcome,
    ProbeRow, ProbeTask, PROBE_CSV_HEADER,
};
pub use report::{all_variants, param_report, ParamTable};
