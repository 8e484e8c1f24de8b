//! On-disk formats: feature files, label maps and dataset manifests.

pub mod feature_file;
pub mod labelmap;
pub mod manifest;

pub use feature_file::{
    decode_feature_map, encode_feature_map, feature_section_bytes, read_feature_file, write_feature_file, FeatureFile,
    FeatureHeader, FeatureMap, SectionKind,
};
pub use labelmap::{LabelMap, DEFAULT_IGNORE};
pub use manifest::{FeatureSource, Manifest, ManifestDataset};
