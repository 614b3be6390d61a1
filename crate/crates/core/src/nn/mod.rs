//! Minimal feed-forward CTR network: ReLU hidden layers, optional inverted
//! dropout, one or more sigmoid heads, analytic gradients, RMSProp and SGD.

mod config;
mod network;
mod optim;

pub use config::{Activation, DropoutPlacement, NetworkConfig, OutputKind};
pub use network::{
    glorot_bound, sigmoid, Example, LayerMasks, MaskSource, Mode, NetworkParams,
};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
