//! Conditioning of continuous recordings into labeled epochs.
//!
//! The stages compose as band-pass (zero phase) → decimation → segmentation
//! → optional amplitude rejection → optional min-max scaling → labels.

mod epochs;
mod filter;
mod pipeline;

pub use epochs::{
    attach_labels, minmax_scale, perclos_label, reject_by_mad, segment_epochs, ContinuousRecording, EpochDataset,
    Epochs, LabelMode,
};
pub use filter::{butter_bandpass_design, butter_lowpass_design, decimate, Biquad, BiquadCascade};
pub use pipeline::{preprocess_pipeline, PreprocessConfig, Profile};
