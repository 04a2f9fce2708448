//! Reverse-mode autodiff, layers, networks and optimizers.

pub mod checkpoint;
pub mod network;
pub mod param;
pub mod tape;

pub use network::{soft_update, Actor, Bound, Critic, Encoder, Module, NetworkSpec};
pub use param::{adam_step, polyak_update, AdamConfig, Parameter};
pub use tape::{Activation, Tape, Var};
