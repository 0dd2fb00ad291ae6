pub mod afm;
pub mod dump;
pub mod saem;
pub mod simam;

pub use afm::{afm_forward, AfmWeights};
pub use dump::dump_feature_map;
pub use saem::{
    aggr_path_add, aggr_path_concat, detail_aggregate, diff_refine, saem_forward, saem_forward_detailed, SaemOutputs,
    SaemWeights,
};
pub use simam::{simam, simam_weights, SimamParams};
