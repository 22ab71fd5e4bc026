//! Differentiable primitives with hand-derived backward passes, the
//! parameter store and the Adam optimizer.

pub mod act;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod params;

pub use conv::{ConvSpec, Padding};
pub use layers::{BatchNorm, Cbr, Conv, Ctx};
pub use norm::Mode;
pub use params::{AdamConfig, Group, GroupRates, ParamId, ParamKind, ParameterStore};
