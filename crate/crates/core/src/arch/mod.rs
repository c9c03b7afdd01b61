//! The counting network: residual fusion modules, pyramid pooling and the
//! sub-pixel decoder, plus checkpointing and a parameter census.

mod census;
pub mod checkpoint;
mod model;
mod params;
mod ppm;
mod rfm;
mod spec;

pub use census::{parameter_census, Census, StageCensus};
pub use model::{count, ForwardTrace, SCNetModel};
pub use params::{ConvRef, ParamId, ParamStore};
pub use ppm::{build_ppm, Ppm, PpmTrace};
pub use rfm::{build_rfm, NestedLayer, Rfm};
pub use spec::{ppm_kernel, ModelSpec, RfmSpec, ENCODER_STRIDE, RFM_LAYERS, SHORTCUT_SPAN};
