pub mod augment;
pub mod io;
pub mod manifest;
pub mod raster;
pub mod sample;
pub mod synth;
pub mod tile;

pub use augment::{augment, AugmentationConfig};
pub use io::{load_sample, save_sample};
pub use manifest::{split_manifest, DatasetManifest, ManifestEntry, Split};
pub use raster::{ObjectKind, Shape};
pub use sample::{stack_batch, BiTemporalSample, Source};
pub use synth::{generate_range, generate_synthetic, ChangeOp, SynthConfig};
pub use tile::tile;
