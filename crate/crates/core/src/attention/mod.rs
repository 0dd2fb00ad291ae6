pub mod block;
pub mod cisa;
pub mod vanilla;

pub use block::{block_forward, BlockWeights};
pub use cisa::{
    branch_a1, branch_a1_with_map, branch_a2, branch_a3, cisa_forward, dws_project, temperature, CisaConfig,
    CisaWeights, DwsProjection,
};
pub use vanilla::{vanilla_attention, vanilla_attention_with_map, VanillaWeights};
