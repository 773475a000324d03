//! Persistence: FVOL volumes, dataset manifests and model checkpoints.

pub mod checkpoint;
pub mod fvol;
pub mod manifest;

pub use checkpoint::Checkpoint;
pub use fvol::{read_fvol, read_label, read_volume, write_fvol, write_label, write_volume, FvolData, FvolField};
pub use manifest::{DatasetManifest, ManifestRecord, ManifestSource, Provenance, Split};
