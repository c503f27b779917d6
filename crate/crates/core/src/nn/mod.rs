//! Parameter storage and the layer building blocks shared by the backbone and detector.

mod graph;
mod layers;
mod params;

pub use graph::Graph;
pub use layers::{init_weight, Dense, LayerNorm, Linear, LoraSlot};
pub use params::{ParamGroup, ParamInfo, ParamRole, ParamStore};
