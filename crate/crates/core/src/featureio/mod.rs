//! On-disk formats: feature archives, text anchors, masks, maps,
//! checkpoints, and the dataset manifest. Everything is little-endian.

mod bytes;

pub mod anchors;
pub mod archive;
pub mod checkpoint;
pub mod manifest;
pub mod pgm;

pub use anchors::TextAnchorSet;
pub use archive::FeatureArchive;
pub use checkpoint::Checkpoint;
pub use manifest::{DatasetManifest, Role, SampleEntry};
pub use pgm::{read_map, write_map, MaskImage};
