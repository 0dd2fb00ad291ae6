pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta};
pub use config::LsatConfig;
pub use model::{decode, encode, encode_siamese, lsat_forward, lsat_forward_detailed, LsatArch, LsatModel, LsatTrace};
