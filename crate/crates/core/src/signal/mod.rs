//! Synthetic 12-lead ECG records with oracle labels, downsampling, lead
//! selection and the text record format.

mod generator;
mod io;
mod record;

pub use generator::{BeatPattern, GeneratorConfig, WaveShape, Waves};
pub use io::{load_manifest, load_records, manifest_files, save_dataset, save_generated, save_records, write_records};
pub use record::{downsample, downsample_tensor, leads_sample, EcgRecord, LabelSet};

/// Lead II, the standard rhythm lead.
pub const LEAD_II: usize = 1;

/// Number of arrhythmia classes (14 named patterns plus "other").
pub const ARRHYTHMIA_CLASSES: usize = 15;
