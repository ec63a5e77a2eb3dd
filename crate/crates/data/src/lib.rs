//! Bitemporal dataset handling: PNG I/O, tiling, labeled/unlabeled
//! partitions, a synthetic change corpus and paired augmentation.

pub mod augment;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod partition;
pub mod synth;
pub mod tile;

pub use error::{DataError, Result};
pub use manifest::{prepare_dataset, Dataset, DatasetManifest, Record, Split};
pub use partition::{partition, partition_manifest, read_partition, write_partition};
pub use synth::{synth_generate, SynthSpec};
pub use tile::tile_pair;
