//! Dataset ingestion, synthetic data, preprocessing and identity-balanced
//! sampling.

mod filename;
mod images;
mod index;
mod sampler;
mod synth;

pub use filename::{format_market_filename, parse_generic_filename, parse_market_filename};
pub use images::{augment_to_chw, chw_tensor, load_chw, load_rgb, Augment, Batch, ImageStore, Sample};
pub use index::{build_index, DatasetIndex, Entry, Layout, Role, GALLERY_DIR, QUERY_DIR, TRAIN_DIR};
pub use sampler::{sample_identity_balanced_batch, BatchIndices};
pub use synth::{
    generate_synthetic_dataset, CueAnnotations, CueRegions, Rect, SyntheticSpec, SyntheticSummary,
    CUES_FILE,
};
