//! Convolutional networks with named feature taps.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{read_manifest, Manifest, TensorEntry};
pub use model::{FeatureMap, ForwardOutput, Mode, Model, Param, RunningStats, BN_EPS, BN_MOMENTUM};
pub use spec::{Family, ModelSpec, TapActivation, GROUP_TAPS};
