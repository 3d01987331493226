//! Linear probes, weight concentration, decoders, latent interpolation,
//! partial swaps, the δ metric and the report.

mod decoder;
mod latent;
mod probe;
mod report;

pub use decoder::{clip_latents, train_decoder, DecoderOutcome, DecoderTrainConfig};
pub use latent::{
    adjacent_mae, decode_frames, delta, delta_curve, delta_from_waves, importance_scores, interpolate,
    interpolation_strip, mae, partial_swap, rank_importance, swap_counts, DELTA_EPS,
};
pub use probe::{
    pool_context, syllable_features, train_probe, weight_concentration, Concentration, FeatureSet, Layer,
    ProbeConfig, ProbeData, ProbeResult, Task, HISTOGRAM_BINS, NEAR_ZERO,
};
pub use report::{
    clip_frames, run_report, sample_pairs, AccuracyRow, ConcentrationRow, DeltaRow, Report, ReportConfig,
    ReportInput, ACCURACY_HEADER, CONCENTRATION_HEADER, CONCENTRATION_SUMMARY_HEADER, DECODERS_HEADER, DELTA_HEADER,
    GAP_FLAG_POINTS, GAP_HEADER, STRIP_ALPHAS,
};
