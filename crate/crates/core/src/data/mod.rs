//! Annotation and feature files, snippet resampling and synthetic data.

mod annotations;
mod dataset;
mod resample;
mod synthetic;
mod tvgf;

pub use annotations::{parse_annotations, read_annotations, sample_ids, write_annotations, Annotation};
pub use dataset::{load_split, split_path, text_path, video_path, write_split};
pub use resample::resample_snippets;
pub use synthetic::{
    generate_synthetic, separability_oracle, snippet_similarity, threshold_moment, GroundingSample, OracleReport,
    SynthSpec, ORACLE_MIN_IOU,
};
pub use tvgf::{decode_tvgf, encode_tvgf, read_feature_file, write_feature_file, FormatError, DTYPE_F32, MAGIC, VERSION};
