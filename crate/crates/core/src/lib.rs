//! Data-regularized deterministic actor-critic for pixel-based continuous
//! control.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`nn`]: a small reverse-mode autodiff engine with the
//!   convolution, linear, normalization and activation layers the agent needs,
//!   Adam, and target-network averaging.
//! * [`augment`]: random-shift image augmentation with bilinear resampling.
//! * [`replay`]: an episodic replay buffer that stores each frame once and
//!   serves n-step batches.
//! * [`envs`]: software-rendered pendulum, cart-pole and point-reacher tasks.
//! * [`agent`]: the learner and actor.
//! * [`harness`]: training loop, evaluation, metrics, benchmarks, ablations
//!   and plots.

pub mod agent;
pub mod augment;
pub mod envs;
pub mod error;
pub mod frame;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Scalar, Tensor};
