//! Encoders and decoders for every on-disk artifact.

pub mod artifacts;
pub mod catalog;
pub mod checkpoint;
pub mod impressions;
pub mod report;

pub use artifacts::{canonical_config_digest, prepare_run_dir, RunArtifacts};
pub use catalog::{load_catalog, load_catalog_dir, write_catalog};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use impressions::{read_impressions, write_impressions, ImpressionWriter};
