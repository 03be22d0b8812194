//! Small f64 neural-network kernel with hand-written backward passes.
//!
//! Parameters live in a [`ParamSet`], a flat list of named 2-D tensors. Layers
//! only store indices into that list, so a network definition is cheap to
//! clone and a parameter snapshot can be swapped under it.

mod encoder;
mod net;
mod optim;
mod params;

pub use encoder::{Encoder, EncoderCache, EncoderConfig};
pub use net::{
    log_softmax, softmax_rows, NetConfig, PolicyCache, PolicyNet, PolicyOutput, StateLayout,
    ValueCache, ValueNet,
};
pub use optim::{Adam, AdamConfig};
pub use params::{
    finite_difference, read_checkpoint, relative_error, write_checkpoint, Dense, Gradients,
    ParamSet, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

#[cfg(test)]
mod tests;
